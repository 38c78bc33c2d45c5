"""
Particle dynamics of the three attention fields under symmetric parameters
(W_Kᵀ W_Q = W_Qᵀ W_K = -W_V).

Main functions:
- field_k0 / field_k1 / field_kinf: velocities of the unnormalised, SoftMax
  and Sinkhorn kernels
- energy_f0 / energy_finf: the energies whose gradients drive k0 and kinf
- euler_flow: explicit Euler trajectory with an energy trace
- stacked_jacobian / symmetry_defect: finite-difference gradient-structure test
"""

import time
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional

import numpy as np

from config import settings
from services.attention import AttentionParams, dot_cost
from services.errors import (
    DivergenceError,
    InvalidParameterError,
    NonSquareError,
)
from services.numerics import CloudLike, SeededRng, as_points, logsumexp_rows
from services.sinkhorn import CostLike, as_cost_array, sinkhorn, softmax
from utils.logger import logger

FieldKind = Literal["k0", "k1", "kinf"]


# ════════════════════════════════════════════════════════════════════════════
# Parameters
# ════════════════════════════════════════════════════════════════════════════


@dataclass(frozen=True)
class SymmetricAttentionParams:
    """
    Query/key pair with symmetric interaction M = W_Qᵀ W_K.

    W_V is always derived as -M; it is never taken from the caller.
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    interaction: np.ndarray = field(init=False)
    W_V: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        W_Q = np.array(self.W_Q, dtype=np.float64, ndmin=2)
        W_K = np.array(self.W_K, dtype=np.float64, ndmin=2)
        if W_Q.shape != W_K.shape:
            raise InvalidParameterError(f"W_Q {W_Q.shape} and W_K {W_K.shape} must share shape")
        M = W_Q.T @ W_K
        scale = max(1.0, float(np.abs(M).max()))
        asymmetry = float(np.abs(M - M.T).max())
        if asymmetry > 1e-12 * scale:
            raise InvalidParameterError(f"W_Kᵀ W_Q is not symmetric (max asymmetry {asymmetry:.2e})")
        M = 0.5 * (M + M.T)
        for name, value in (("W_Q", W_Q), ("W_K", W_K), ("interaction", M), ("W_V", -M)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def tied(cls, W: np.ndarray) -> "SymmetricAttentionParams":
        """W_Q = W_K = W, so the interaction WᵀW is positive semi-definite."""
        return cls(W, W)

    @classmethod
    def from_interaction(cls, M: np.ndarray) -> "SymmetricAttentionParams":
        """W_Q = I, W_K = M for a symmetric M."""
        M = np.array(M, dtype=np.float64, ndmin=2)
        if M.shape[0] != M.shape[1]:
            raise NonSquareError(f"interaction must be square, got {M.shape}")
        return cls(np.eye(M.shape[0]), M)

    @property
    def d(self) -> int:
        return self.interaction.shape[0]

    def as_attention_params(self) -> AttentionParams:
        return AttentionParams(self.W_Q, self.W_K, self.W_V)


def random_symmetric_params(rng: SeededRng, d: int, scale: float = 0.5) -> SymmetricAttentionParams:
    """Tied random weights W with i.i.d. N(0, scale²/d) entries."""
    if d < 1 or not scale > 0:
        raise InvalidParameterError(f"need d >= 1 and scale > 0, got d={d}, scale={scale}")
    W = rng.generator.standard_normal((d, d)) * scale / np.sqrt(d)
    return SymmetricAttentionParams.tied(W)


@dataclass(frozen=True)
class FlowConfig:
    step: float = 1e-3
    steps: int = 200
    field_kind: FieldKind = "k0"
    sinkhorn_tolerance: float = 1e-10

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise InvalidParameterError(f"Euler step must be > 0, got {self.step}")
        if self.steps < 0:
            raise InvalidParameterError(f"steps must be >= 0, got {self.steps}")
        if self.field_kind not in ("k0", "k1", "kinf"):
            raise InvalidParameterError(f"unknown field kind '{self.field_kind}'")
        if not self.sinkhorn_tolerance > 0:
            raise InvalidParameterError(f"Sinkhorn tolerance must be > 0, got {self.sinkhorn_tolerance}")


# ════════════════════════════════════════════════════════════════════════════
# Fields
# ════════════════════════════════════════════════════════════════════════════


def _cost(X: np.ndarray, p: SymmetricAttentionParams) -> np.ndarray:
    return dot_cost(p.as_attention_params(), X).C


def field_k0(X: CloudLike, p: SymmetricAttentionParams) -> np.ndarray:
    """v_i = (1/n) sum_j exp(C_ij) W_V x_j."""
    x = as_points(X)
    return np.exp(_cost(x, p)) @ (x @ p.W_V.T) / x.shape[0]


def field_k1(X: CloudLike, p: SymmetricAttentionParams) -> np.ndarray:
    """v_i = sum_j softmax(C)_ij W_V x_j."""
    x = as_points(X)
    return softmax(_cost(x, p)) @ (x @ p.W_V.T)


def field_kinf(X: CloudLike, p: SymmetricAttentionParams, tol: Optional[float] = None) -> np.ndarray:
    """v_i = sum_j K∞_ij W_V x_j with K∞ solved to tol."""
    x = as_points(X)
    result = sinkhorn(_cost(x, p), tolerance=tol)
    return result.K @ (x @ p.W_V.T)


def log_partition(query: np.ndarray, X: CloudLike, p: SymmetricAttentionParams) -> float:
    """log((1/n) sum_j exp(c(x, x_j))) with the cloud held fixed."""
    x = as_points(X)
    row = (np.asarray(query, dtype=np.float64).reshape(1, -1) @ p.W_Q.T) @ (x @ p.W_K.T).T
    return float(logsumexp_rows(row)[0] - np.log(x.shape[0]))


def make_field(kind: FieldKind, p: SymmetricAttentionParams, tol: Optional[float] = None):
    if kind == "k0":
        return lambda X: field_k0(X, p)
    if kind == "k1":
        return lambda X: field_k1(X, p)
    if kind == "kinf":
        return lambda X: field_kinf(X, p, tol)
    raise InvalidParameterError(f"unknown field kind '{kind}'")


# ════════════════════════════════════════════════════════════════════════════
# Energies
# ════════════════════════════════════════════════════════════════════════════


def energy_f0(X: CloudLike, p: SymmetricAttentionParams) -> float:
    """(1/2n²) sum_ij exp(C_ij)."""
    x = as_points(X)
    return float(np.exp(_cost(x, p)).sum() / (2.0 * x.shape[0] ** 2))


def energy_finf_from_cost(
    C: CostLike,
    tol: Optional[float] = None,
    route: Literal["primal", "dual"] = "primal",
) -> float:
    """
    -(1/2n²) sum_ij k_ij log(k_ij / exp(C_ij)) with k = n·K∞.

    The dual route uses -(1/n) sum_i phi_i where phi = (f_c + g)/2 is the
    symmetric gauge of the continuous potentials; it needs a symmetric C.
    """
    C = as_cost_array(C)
    result = sinkhorn(C, tolerance=tol)
    n = result.n
    f_c, g = result.continuous_potentials()
    if route == "primal":
        k = n * result.K
        with np.errstate(divide="ignore"):
            log_ratio = np.where(k > 0, np.log(k) - C, 0.0)
        return float(-(k * log_ratio).sum() / (2.0 * n * n))
    if route == "dual":
        if np.abs(C - C.T).max() > 1e-12 * max(1.0, float(np.abs(C).max())):
            raise InvalidParameterError("dual energy route needs a symmetric cost")
        phi = 0.5 * (f_c + g)
        return float(-0.5 * (phi + phi).sum() / n)
    raise InvalidParameterError(f"unknown energy route '{route}'")


def energy_finf(
    X: CloudLike,
    p: SymmetricAttentionParams,
    tol: Optional[float] = None,
    route: Literal["primal", "dual"] = "primal",
) -> float:
    return energy_finf_from_cost(_cost(as_points(X), p), tol, route)


# ════════════════════════════════════════════════════════════════════════════
# Euler flow
# ════════════════════════════════════════════════════════════════════════════


@dataclass
class FlowTrajectory:
    clouds: List[np.ndarray]
    energies: Optional[np.ndarray]
    config: FlowConfig
    elapsed: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return self.config.step * np.arange(len(self.clouds))


def _energy(kind: FieldKind, X: np.ndarray, p: SymmetricAttentionParams, tol: float) -> Optional[float]:
    if kind == "k0":
        return energy_f0(X, p)
    if kind == "kinf":
        return energy_finf(X, p, tol)
    return None


def euler_flow(X0: CloudLike, cfg: FlowConfig, p: SymmetricAttentionParams) -> FlowTrajectory:
    """
    X_{t+1} = X_t + h·field(X_t) for cfg.steps steps.

    The energy trace holds F⁰ (k0) or F∞ (kinf) at every visited cloud; the
    SoftMax field is not a gradient flow and carries no energy.

    Raises:
        DivergenceError: a coordinate leaves the box |x| <= DIVERGENCE_BOUND.
    """
    velocity = make_field(cfg.field_kind, p, cfg.sinkhorn_tolerance)
    x = np.array(as_points(X0), dtype=np.float64)
    clouds = [x.copy()]
    energies: List[float] = []
    has_energy = cfg.field_kind != "k1"
    if has_energy:
        energies.append(_energy(cfg.field_kind, x, p, cfg.sinkhorn_tolerance))

    logger.info(
        f"Euler flow {cfg.field_kind}: n={x.shape[0]} d={x.shape[1]} h={cfg.step} steps={cfg.steps}"
    )
    start = time.time()
    for step in range(1, cfg.steps + 1):
        x = x + cfg.step * velocity(x)
        peak = float(np.abs(x).max())
        if not np.isfinite(peak) or peak > settings.divergence_bound:
            raise DivergenceError(f"flow diverged at step {step} (max |x| = {peak:.3e})", step, peak)
        clouds.append(x.copy())
        if has_energy:
            energies.append(_energy(cfg.field_kind, x, p, cfg.sinkhorn_tolerance))

    elapsed = time.time() - start
    if has_energy:
        logger.info(f"Flow finished in {elapsed:.2f}s, energy {energies[0]:.6g} -> {energies[-1]:.6g}")
    else:
        logger.info(f"Flow finished in {elapsed:.2f}s")
    return FlowTrajectory(
        clouds=clouds,
        energies=np.array(energies) if has_energy else None,
        config=cfg,
        elapsed=elapsed,
    )


# ════════════════════════════════════════════════════════════════════════════
# Gradient-structure certificate
# ════════════════════════════════════════════════════════════════════════════


def stacked_jacobian(
    velocity: Callable[[np.ndarray], np.ndarray],
    X: CloudLike,
    step: float = 1e-6,
) -> np.ndarray:
    """
    nd×nd central-difference Jacobian of a cloud field.

    Column (j, b) is d v / d x_{j,b}; rows and columns use the row-major
    stacking (i, a) -> i·d + a.
    """
    x = np.array(as_points(X), dtype=np.float64)
    n, d = x.shape
    J = np.empty((n * d, n * d))
    for col in range(n * d):
        j, b = divmod(col, d)
        original = x[j, b]
        x[j, b] = original + step
        upper = np.asarray(velocity(x)).reshape(-1)
        x[j, b] = original - step
        lower = np.asarray(velocity(x)).reshape(-1)
        x[j, b] = original
        J[:, col] = (upper - lower) / (2.0 * step)
    return J


def symmetry_defect(J: np.ndarray) -> float:
    """‖J - Jᵀ‖_F / max(‖J‖_F, 1e-300)."""
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise NonSquareError(f"symmetry defect needs a square matrix, got {J.shape}")
    return float(np.linalg.norm(J - J.T) / max(np.linalg.norm(J), 1e-300))
