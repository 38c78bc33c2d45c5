"""
Single-head residual attention with SoftMax or Sinkhorn normalisation.

Main functions:
- dot_cost / l2_cost: C from the query/key matrices
- attention_kernel: K from a cost and a NormalizationSpec
- attention_forward: x_i <- x_i + sum_j K_ij W_V x_j
- column_sum_stats: column-sum summary of attention kernels
"""

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from config import settings
from services.errors import DimensionMismatchError, InvalidParameterError
from services.numerics import CloudLike, ParticleCloud, as_points
from services.sinkhorn import CostMatrix, sinkhorn, softmax

HISTOGRAM_BINS = 60
HISTOGRAM_RANGE = (0.0, 3.0)


@dataclass(frozen=True)
class AttentionParams:
    """Query/key matrices (m×d) and value matrix (d×d)."""

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    def __post_init__(self) -> None:
        W_Q = np.array(self.W_Q, dtype=np.float64, ndmin=2)
        W_K = np.array(self.W_K, dtype=np.float64, ndmin=2)
        W_V = np.array(self.W_V, dtype=np.float64, ndmin=2)
        if W_Q.shape != W_K.shape:
            raise DimensionMismatchError(f"W_Q {W_Q.shape} and W_K {W_K.shape} must share shape m×d")
        d = W_Q.shape[1]
        if W_V.shape != (d, d):
            raise DimensionMismatchError(f"W_V must be {d}×{d}, got {W_V.shape}")
        for name, value in (("W_Q", W_Q), ("W_K", W_K), ("W_V", W_V)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def m(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    def satisfies_symmetry(self, tol: float = 1e-12) -> bool:
        """W_Kᵀ W_Q = W_Qᵀ W_K = -W_V within tol."""
        interaction = self.W_Q.T @ self.W_K
        scale = max(1.0, float(np.abs(interaction).max()))
        return bool(
            np.abs(interaction - interaction.T).max() <= tol * scale
            and np.abs(self.W_V + interaction).max() <= tol * scale
        )


@dataclass(frozen=True)
class NormalizationSpec:
    kind: Literal["softmax", "sinkhorn"] = "softmax"
    iterations: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("softmax", "sinkhorn"):
            raise InvalidParameterError(f"unknown normalization '{self.kind}'")
        if self.kind == "softmax":
            object.__setattr__(self, "iterations", 1)
        elif self.iterations < 1 or self.iterations % 2 == 0:
            raise InvalidParameterError(
                f"Sinkhorn attention needs an odd iteration count >= 1, got {self.iterations}"
            )

    @classmethod
    def softmax(cls) -> "NormalizationSpec":
        return cls("softmax", 1)

    @classmethod
    def sinkhorn(cls, iterations: Optional[int] = None) -> "NormalizationSpec":
        return cls("sinkhorn", settings.attention_iterations if iterations is None else iterations)

    def __str__(self) -> str:
        return "softmax" if self.kind == "softmax" else f"sinkhorn({self.iterations})"


# ════════════════════════════════════════════════════════════════════════════
# Costs
# ════════════════════════════════════════════════════════════════════════════


def _check_dims(params: AttentionParams, pts: np.ndarray, label: str) -> None:
    if pts.shape[1] != params.d:
        raise DimensionMismatchError(
            f"{label} has dimension {pts.shape[1]}, parameters expect {params.d}"
        )


def dot_cost(params: AttentionParams, X: CloudLike, Y: Optional[CloudLike] = None) -> CostMatrix:
    """C[i, j] = (W_Q x_i)ᵀ (W_K y_j); Y defaults to X (self-attention)."""
    x = as_points(X)
    y = x if Y is None else as_points(Y)
    _check_dims(params, x, "X")
    _check_dims(params, y, "Y")
    C = (x @ params.W_Q.T) @ (y @ params.W_K.T).T
    return CostMatrix(C, _as_cloud(X), None if Y is None else _as_cloud(Y))


def l2_cost(params: AttentionParams, X: CloudLike, Y: Optional[CloudLike] = None) -> CostMatrix:
    """C̃[i, j] = -½‖W_Q x_i - W_K y_j‖²."""
    x = as_points(X)
    y = x if Y is None else as_points(Y)
    _check_dims(params, x, "X")
    _check_dims(params, y, "Y")
    C = -0.5 * cdist(x @ params.W_Q.T, y @ params.W_K.T, "sqeuclidean")
    return CostMatrix(C, _as_cloud(X), None if Y is None else _as_cloud(Y))


def _as_cloud(X: CloudLike) -> ParticleCloud:
    return X if isinstance(X, ParticleCloud) else ParticleCloud(X)


# ════════════════════════════════════════════════════════════════════════════
# Forward pass
# ════════════════════════════════════════════════════════════════════════════


def attention_kernel(C: CostMatrix, norm: NormalizationSpec) -> np.ndarray:
    if norm.kind == "softmax":
        return softmax(C)
    return sinkhorn(C, iterations=norm.iterations).K


def attention_forward(
    X: CloudLike,
    params: AttentionParams,
    norm: Optional[NormalizationSpec] = None,
) -> ParticleCloud:
    """One residual attention update; the input cloud is left untouched."""
    norm = norm or NormalizationSpec.softmax()
    x = as_points(X)
    K = attention_kernel(dot_cost(params, x), norm)
    return ParticleCloud(x + K @ (x @ params.W_V.T))


# ════════════════════════════════════════════════════════════════════════════
# Column-sum instrumentation
# ════════════════════════════════════════════════════════════════════════════


@dataclass
class ColumnSumStats:
    sums: np.ndarray
    minimum: float
    maximum: float
    mean: float
    histogram: np.ndarray
    bin_edges: np.ndarray
    overflow: int = 0
    kernels: int = 1

    @property
    def spread(self) -> float:
        return self.maximum - self.minimum

    def to_dict(self) -> dict:
        return {
            "kernels": self.kernels,
            "columns": int(self.sums.size),
            "min": self.minimum,
            "max": self.maximum,
            "mean": self.mean,
            "spread": self.spread,
            "max_deviation": float(np.abs(self.sums - 1.0).max()),
            "histogram": {
                "range": list(HISTOGRAM_RANGE),
                "bins": HISTOGRAM_BINS,
                "counts": [int(c) for c in self.histogram],
                "overflow": self.overflow,
            },
            "sums": [float(s) for s in self.sums],
        }


def column_sum_stats(K: Union[np.ndarray, Sequence[np.ndarray]]) -> ColumnSumStats:
    """
    Exact column sums of one kernel or of a batch of kernels, pooled.

    Histogram: 60 fixed bins over [0, 3]; sums beyond 3 are counted in overflow.
    """
    if isinstance(K, np.ndarray) and K.ndim == 2:
        kernels = [np.asarray(K, dtype=np.float64)]
    else:
        kernels = [np.asarray(k, dtype=np.float64) for k in K]
    if not kernels:
        raise InvalidParameterError("column_sum_stats needs at least one kernel")
    sums = np.concatenate([k.sum(axis=0) for k in kernels])
    counts, edges = np.histogram(sums, bins=HISTOGRAM_BINS, range=HISTOGRAM_RANGE)
    overflow = int(sums.size - counts.sum())
    return ColumnSumStats(
        sums=sums,
        minimum=float(sums.min()),
        maximum=float(sums.max()),
        mean=float(sums.mean()),
        histogram=counts,
        bin_edges=edges,
        overflow=overflow,
        kernels=len(kernels),
    )
