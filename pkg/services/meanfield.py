"""
Bandwidth-ε attention maps in the mean-field regime.

Main functions:
- DensityModel: Gaussian / Gaussian-mixture oracle with closed-form score
- solve_potentials: symmetric (gauge-fixed) Sinkhorn on the samples, blockwise
- rescaled_sink_field / rescaled_softmax_field: the first-order-corrected maps
- analytic_limit_sink / analytic_limit_softmax: their ε -> 0 limits
- epsilon_convergence_experiment: RMS error along a bandwidth sweep
- heat_simulation: particles pushed by the Sinkhorn map, variance trace

Kernels are never materialised as n×n: every sum over samples runs over
blocks of BLOCK_SIZE query rows.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.special import softmax as softmax_weights
from scipy.stats import norm

from config import settings
from services.errors import (
    DimensionMismatchError,
    DivergenceError,
    InvalidParameterError,
    NonConvergenceError,
)
from services.flows import SymmetricAttentionParams
from services.numerics import CloudLike, SeededRng, as_points
from services.sinkhorn import extend_potential
from utils.logger import logger

# The Sinkhorn kernel at bandwidth ε moves the conditional mean by
# (ε/2)·M⁻¹∇log ρ, half the SoftMax displacement; 2/ε puts its drift on the
# heat-equation time scale.
SINK_DRIFT_SCALE = 2.0

Sampling = Literal["iid", "stratified"]


# ════════════════════════════════════════════════════════════════════════════
# Density oracle
# ════════════════════════════════════════════════════════════════════════════


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64, ndmin=1)
        cov = np.array(self.cov, dtype=np.float64, ndmin=2)
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatchError(f"covariance {cov.shape} does not match mean of size {mean.size}")
        if not self.weight > 0:
            raise InvalidParameterError(f"component weight must be > 0, got {self.weight}")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as e:
            raise InvalidParameterError(f"covariance is not positive definite: {e}") from e
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        d = self.mean.size
        z = solve_triangular(self.chol, (x - self.mean).T, lower=True)
        log_det = 2.0 * np.log(np.diag(self.chol)).sum()
        return -0.5 * (z * z).sum(axis=0) - 0.5 * (log_det + d * np.log(2.0 * np.pi))

    def score(self, x: np.ndarray) -> np.ndarray:
        return -cho_solve((self.chol, True), (x - self.mean).T).T


class DensityModel:
    """Analytic density ρ with closed-form ∇ρ and score ∇ρ/ρ."""

    def __init__(self, components: Sequence[GaussianComponent], kind: str = "gaussian_mixture"):
        if not components:
            raise InvalidParameterError("density needs at least one component")
        dims = {c.mean.size for c in components}
        if len(dims) != 1:
            raise DimensionMismatchError(f"components disagree on dimension: {sorted(dims)}")
        total = sum(c.weight for c in components)
        self.components = [
            GaussianComponent(c.weight / total, c.mean, c.cov) for c in components
        ]
        self.kind = kind
        self.d = dims.pop()

    @classmethod
    def gaussian(cls, mean, cov) -> "DensityModel":
        return cls([GaussianComponent(1.0, mean, cov)], kind="gaussian")

    @classmethod
    def standard(cls, d: int = 1) -> "DensityModel":
        return cls.gaussian(np.zeros(d), np.eye(d))

    @classmethod
    def mixture(cls, components: Sequence[Tuple[float, object, object]]) -> "DensityModel":
        return cls([GaussianComponent(w, m, c) for w, m, c in components], kind="gaussian_mixture")

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def _queries(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            x = x.reshape(-1, 1) if self.d == 1 else x.reshape(1, -1)
        if x.shape[1] != self.d:
            raise DimensionMismatchError(f"queries have dimension {x.shape[1]}, density has {self.d}")
        return x

    def _component_log_pdfs(self, x: np.ndarray) -> np.ndarray:
        return np.stack([np.log(c.weight) + c.log_pdf(x) for c in self.components], axis=1)

    def log_pdf(self, x) -> np.ndarray:
        return logsumexp(self._component_log_pdfs(self._queries(x)), axis=1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    def score(self, x) -> np.ndarray:
        """∇ρ/ρ = ∇log ρ, responsibility-weighted component scores."""
        x = self._queries(x)
        resp = softmax_weights(self._component_log_pdfs(x), axis=1)
        return sum(resp[:, [k]] * c.score(x) for k, c in enumerate(self.components))

    def grad(self, x) -> np.ndarray:
        x = self._queries(x)
        return self.pdf(x)[:, None] * self.score(x)

    # ─── Sampling ────────────────────────────────────────────────────────────

    def sample(self, rng: SeededRng, n: int, sampling: Sampling = "iid") -> np.ndarray:
        """
        n points from ρ.

        "stratified" uses jittered Latin-hypercube uniforms pushed through the
        normal quantile function, with mixture components allocated by largest
        remainder; it removes most of the Monte-Carlo noise of kernel averages.
        """
        if n < 1:
            raise InvalidParameterError(f"sample size must be >= 1, got {n}")
        gen = rng.generator
        if sampling == "iid":
            labels = gen.choice(len(self.components), size=n, p=self.weights)
            z = gen.standard_normal((n, self.d))
            out = np.empty((n, self.d))
            for k, c in enumerate(self.components):
                mask = labels == k
                out[mask] = c.mean + z[mask] @ c.chol.T
            return out
        if sampling == "stratified":
            counts = _largest_remainder(self.weights, n)
            parts = []
            for count, c in zip(counts, self.components):
                if count == 0:
                    continue
                u = np.stack(
                    [(gen.permutation(count) + gen.random(count)) / count for _ in range(self.d)],
                    axis=1,
                )
                parts.append(c.mean + norm.ppf(u) @ c.chol.T)
            return np.concatenate(parts)[gen.permutation(n)]
        raise InvalidParameterError(f"unknown sampling mode '{sampling}'")


def _largest_remainder(weights: np.ndarray, n: int) -> np.ndarray:
    raw = weights * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    if short:
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


# ════════════════════════════════════════════════════════════════════════════
# Blockwise kernel sums
# ════════════════════════════════════════════════════════════════════════════


def _metric_factor(M: np.ndarray) -> np.ndarray:
    """A with AᵀA = M for a positive semi-definite M."""
    w, V = np.linalg.eigh(M)
    if w.min() < -1e-10 * max(1.0, float(np.abs(w).max())):
        raise InvalidParameterError(f"W_Kᵀ W_Q must be positive semi-definite (min eigenvalue {w.min():.3e})")
    return np.sqrt(np.clip(w, 0.0, None))[:, None] * V.T


def _kernel_average(
    Yq: np.ndarray,
    Ys: np.ndarray,
    bias: np.ndarray,
    eps: float,
    values: np.ndarray,
    block: Optional[int] = None,
) -> np.ndarray:
    """sum_j w_ij values_j with w_i = softmax_j(-½‖Yq_i - Ys_j‖²/ε + bias_j)."""
    block = block or settings.block_size
    q = Yq.shape[0]
    avg = np.empty((q, values.shape[1]))
    for start in range(0, q, block):
        stop = min(start + block, q)
        logits = bias[None, :] - 0.5 * cdist(Yq[start:stop], Ys, "sqeuclidean") / eps
        avg[start:stop] = softmax_weights(logits, axis=1) @ values
    return avg


def _soft_c_transform(
    Yq: np.ndarray, Ys: np.ndarray, g: np.ndarray, eps: float, block: Optional[int] = None
) -> np.ndarray:
    """extend_potential on the L2 cost rows -½‖Yq_i - Ys_j‖²/ε, one block of queries at a time."""
    block = block or settings.block_size
    f = np.empty(Yq.shape[0])
    for start in range(0, Yq.shape[0], block):
        stop = min(start + block, Yq.shape[0])
        f[start:stop] = extend_potential(-0.5 * cdist(Yq[start:stop], Ys, "sqeuclidean") / eps, g)
    return f


# ════════════════════════════════════════════════════════════════════════════
# Symmetric Sinkhorn on the samples
# ════════════════════════════════════════════════════════════════════════════


@dataclass
class MeanFieldPotentials:
    """Symmetric continuous potential g with (1/n) sum_j exp(c_ij/ε + g_i + g_j) = 1."""

    g: np.ndarray
    eps: float
    iterations: int
    violation: float


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise InvalidParameterError(f"bandwidth ε must be > 0, got {eps}")


def solve_potentials(
    samples: CloudLike,
    p: SymmetricAttentionParams,
    eps: float,
    tol: Optional[float] = None,
    max_iterations: Optional[int] = None,
    initial: Optional[np.ndarray] = None,
    block: Optional[int] = None,
) -> MeanFieldPotentials:
    """
    Symmetric Sinkhorn on the cost -½(x - x')ᵀM(x - x')/ε.

    Averaged update g <- ½(g + T g), T g = log n - lse_j(c_ij/ε + g_j). The
    L2 cost differs from xᵀMx'/ε by per-point terms only, so the kernel is the
    same; the gauge f = g is fixed by symmetry.
    """
    _check_eps(eps)
    tol = settings.meanfield_tolerance if tol is None else tol
    max_iterations = settings.meanfield_max_iterations if max_iterations is None else max_iterations
    x = as_points(samples)
    n = x.shape[0]
    Y = x @ _metric_factor(p.interaction).T
    g = np.zeros(n) if initial is None else np.array(initial, dtype=np.float64)
    if g.shape != (n,):
        raise DimensionMismatchError(f"initial potential has shape {g.shape}, expected ({n},)")

    violation = np.inf
    for iteration in range(max_iterations + 1):
        transformed = _soft_c_transform(Y, Y, g, eps, block=block)
        violation = float(np.abs(np.expm1(g - transformed)).max())
        if violation <= tol:
            logger.debug(f"Symmetric Sinkhorn n={n} ε={eps}: {iteration} updates, violation {violation:.2e}")
            return MeanFieldPotentials(g=g, eps=eps, iterations=iteration, violation=violation)
        if iteration < max_iterations:
            g = 0.5 * (g + transformed)
    raise NonConvergenceError(f"symmetric Sinkhorn at ε={eps} did not converge", max_iterations, violation)


def extend_potentials(
    samples: CloudLike,
    p: SymmetricAttentionParams,
    potentials: MeanFieldPotentials,
    queries: np.ndarray,
    block: Optional[int] = None,
) -> np.ndarray:
    """Soft c-transform f(x) = -log((1/n) sum_j exp(g_j + c(x, x_j)/ε)) per query."""
    x = as_points(samples)
    A = _metric_factor(p.interaction)
    q = _as_queries(queries, x.shape[1])
    return _soft_c_transform(q @ A.T, x @ A.T, potentials.g, potentials.eps, block=block)


def _as_queries(queries, d: int) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q.reshape(-1, 1) if d == 1 else q.reshape(1, -1)
    if q.ndim != 2 or q.shape[1] != d:
        raise DimensionMismatchError(f"queries must be q×{d}, got shape {q.shape}")
    return q


# ════════════════════════════════════════════════════════════════════════════
# Rescaled fields
# ════════════════════════════════════════════════════════════════════════════


def rescaled_sink_field(
    samples: CloudLike,
    p: SymmetricAttentionParams,
    eps: float,
    queries: np.ndarray,
    tol: Optional[float] = None,
    drift_scale: float = SINK_DRIFT_SCALE,
    value_matrix: Optional[np.ndarray] = None,
    potentials: Optional[MeanFieldPotentials] = None,
    block: Optional[int] = None,
) -> np.ndarray:
    """
    T̄(x) = (drift_scale/ε)[(1/n) sum_j k_ε(x, x_j) W_V x_j - W_V x].

    k_ε(x, x_j) = exp(c(x, x_j)/ε + f(x) + g_j) with f the soft c-transform of
    the in-sample potential, so queries never perturb the sample measure.
    With (1/n) k_ε summing to one over j, the bracket is a softmax average.

    Args:
        value_matrix: W_V override; the limit is then W_V (W_Qᵀ W_K)⁻¹ ∇ρ/ρ
        potentials: reuse a converged solve on the same samples and ε
    """
    _check_eps(eps)
    x = as_points(samples)
    q = _as_queries(queries, x.shape[1])
    if potentials is None:
        potentials = solve_potentials(x, p, eps, tol=tol, block=block)
    elif potentials.g.shape != (x.shape[0],) or potentials.eps != eps:
        raise InvalidParameterError("potentials were solved for other samples or another ε")
    W_V = p.W_V if value_matrix is None else np.asarray(value_matrix, dtype=np.float64)
    A = _metric_factor(p.interaction)
    avg = _kernel_average(q @ A.T, x @ A.T, potentials.g, eps, x @ W_V.T, block=block)
    return (drift_scale / eps) * (avg - q @ W_V.T)


def _check_conditioning(W: np.ndarray, label: str) -> None:
    if W.shape[0] != W.shape[1]:
        raise DimensionMismatchError(f"{label} must be square, got {W.shape}")
    condition = np.linalg.cond(W)
    if not np.isfinite(condition) or condition > 1e12:
        raise InvalidParameterError(f"{label} is singular (condition number {condition:.3e})")


def rescaled_softmax_field(
    samples: CloudLike,
    p: SymmetricAttentionParams,
    eps: float,
    queries: np.ndarray,
    block: Optional[int] = None,
) -> np.ndarray:
    """T̄(x) = (1/ε)[sum_j w_j(x) W_V x_j + W_Qᵀ W_Q x], w = softmax_j(c̃(x, x_j)/ε)."""
    _check_eps(eps)
    _check_conditioning(p.W_K, "W_K")
    x = as_points(samples)
    q = _as_queries(queries, x.shape[1])
    avg = _kernel_average(q @ p.W_Q.T, x @ p.W_K.T, np.zeros(x.shape[0]), eps, x @ p.W_V.T, block=block)
    return (avg + q @ (p.W_Q.T @ p.W_Q).T) / eps


# ════════════════════════════════════════════════════════════════════════════
# Analytic limits
# ════════════════════════════════════════════════════════════════════════════


def analytic_limit_sink(
    rho: DensityModel,
    x,
    p: Optional[SymmetricAttentionParams] = None,
    value_matrix: Optional[np.ndarray] = None,
) -> np.ndarray:
    """-∇ρ/ρ, or W_V (W_Qᵀ W_K)⁻¹ ∇ρ/ρ for an explicit value matrix."""
    score = rho.score(x)
    if value_matrix is None:
        return -score
    if p is None:
        raise InvalidParameterError("a value matrix needs the query/key parameters")
    transfer = np.asarray(value_matrix, dtype=np.float64) @ np.linalg.inv(p.interaction)
    return score @ transfer.T


def analytic_limit_softmax(rho: DensityModel, p: SymmetricAttentionParams, x) -> np.ndarray:
    """-W_Qᵀ W_K⁻¹ (∇ρ/ρ)(W_K⁻¹ W_Q x)."""
    _check_conditioning(p.W_K, "W_K")
    q = rho._queries(x)
    K_inv = np.linalg.inv(p.W_K)
    shifted = q @ (K_inv @ p.W_Q).T
    return -rho.score(shifted) @ (p.W_Q.T @ K_inv).T


# ════════════════════════════════════════════════════════════════════════════
# Bandwidth sweep
# ════════════════════════════════════════════════════════════════════════════


@dataclass(frozen=True)
class EpsilonSweep:
    epsilons: Tuple[float, ...]
    n: int
    grid: np.ndarray
    seed: int = 0
    sampling: Sampling = "stratified"

    def __post_init__(self) -> None:
        eps = tuple(float(e) for e in self.epsilons)
        if not eps or any(not e > 0 for e in eps):
            raise InvalidParameterError(f"bandwidths must be positive, got {eps}")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise InvalidParameterError(f"bandwidths must be strictly decreasing, got {eps}")
        if self.n < 1:
            raise InvalidParameterError(f"sample count must be >= 1, got {self.n}")
        if self.sampling not in ("iid", "stratified"):
            raise InvalidParameterError(f"unknown sampling mode '{self.sampling}'")
        grid = np.array(self.grid, dtype=np.float64)
        if grid.ndim == 1:
            grid = grid.reshape(-1, 1)
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(self, "grid", grid)


def uniform_grid(start: float, stop: float, count: int) -> np.ndarray:
    if count < 1:
        raise InvalidParameterError(f"grid needs at least one point, got {count}")
    return np.linspace(start, stop, count).reshape(-1, 1)


def _rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(values * values, axis=1))))


def epsilon_convergence_experiment(
    rho: DensityModel,
    p: SymmetricAttentionParams,
    sweep: EpsilonSweep,
    which: Literal["sink", "softmax"] = "sink",
    tol: Optional[float] = None,
    block: Optional[int] = None,
) -> pd.DataFrame:
    """
    RMS of ‖T̄_ε(x) - T̄_0(x)‖ over the grid for every ε of the sweep.

    Each ε gets its own substream of the sweep seed, so samples are redrawn
    per ε but reproducibly.

    Returns:
        DataFrame with columns epsilon, rms_error, relative_rms, iterations.
    """
    if which == "sink":
        target = analytic_limit_sink(rho, sweep.grid)
    elif which == "softmax":
        target = analytic_limit_softmax(rho, p, sweep.grid)
    else:
        raise InvalidParameterError(f"unknown field '{which}'")
    target_rms = _rms(target)
    if target_rms == 0.0:
        logger.warning("Limit field vanishes on the grid; relative error is undefined")

    rows = []
    streams = SeededRng(sweep.seed).split(len(sweep.epsilons))
    for eps, stream in zip(sweep.epsilons, streams):
        start = time.time()
        samples = rho.sample(stream, sweep.n, sweep.sampling)
        if which == "sink":
            potentials = solve_potentials(samples, p, eps, tol=tol, block=block)
            values = rescaled_sink_field(samples, p, eps, sweep.grid, potentials=potentials, block=block)
            iterations = potentials.iterations
        else:
            values = rescaled_softmax_field(samples, p, eps, sweep.grid, block=block)
            iterations = 0
        rms = _rms(values - target)
        relative = rms / target_rms if target_rms > 0 else float("nan")
        logger.info(
            f"{which} ε={eps:g} n={sweep.n}: RMS {rms:.4e} (relative {relative:.2%}) "
            f"in {time.time() - start:.1f}s"
        )
        rows.append({"epsilon": eps, "rms_error": rms, "relative_rms": relative, "iterations": iterations})
    return pd.DataFrame(rows, columns=["epsilon", "rms_error", "relative_rms", "iterations"])


def field_gap(
    rho: DensityModel,
    p: SymmetricAttentionParams,
    eps: float,
    n: int,
    grid: np.ndarray,
    seed: int = 0,
    sampling: Sampling = "stratified",
    tol: Optional[float] = None,
) -> float:
    """Relative RMS distance between the empirical SoftMax and Sinkhorn maps on one sample."""
    samples = rho.sample(SeededRng(seed), n, sampling)
    sink = rescaled_sink_field(samples, p, eps, grid, tol=tol)
    soft = rescaled_softmax_field(samples, p, eps, grid)
    return _rms(soft - sink) / max(_rms(sink), 1e-300)


# ════════════════════════════════════════════════════════════════════════════
# Heat simulation
# ════════════════════════════════════════════════════════════════════════════


@dataclass
class HeatTrace:
    times: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    snapshots: Dict[int, np.ndarray]
    iterations: List[int]

    @property
    def variance(self) -> np.ndarray:
        """Per-step variance averaged over coordinates."""
        return self.variances.mean(axis=1)

    def to_frame(self) -> pd.DataFrame:
        d = self.means.shape[1]
        data = {"step": np.arange(self.times.size), "time": self.times}
        data.update({f"mean_{k}": self.means[:, k] for k in range(d)})
        data.update({f"variance_{k}": self.variances[:, k] for k in range(d)})
        data["variance"] = self.variance
        return pd.DataFrame(data)


def variance_slope(trace: HeatTrace) -> float:
    """Least-squares slope of Var(t); the heat equation gives 2 per coordinate."""
    if trace.times.size < 2:
        raise InvalidParameterError("slope needs at least two recorded steps")
    return float(np.polyfit(trace.times, trace.variance, 1)[0])


def heat_simulation(
    rho0: DensityModel,
    eps: float,
    h: float,
    steps: int,
    n: int,
    seed: int = 0,
    sampling: Sampling = "iid",
    snapshot_every: int = 10,
    tol: Optional[float] = None,
    block: Optional[int] = None,
) -> HeatTrace:
    """
    Push n particles with X <- X + h·T̄∞(X) for W_Q = W_K = I, W_V = -I.

    Potentials are re-solved every step (the measure moves), warm-started
    from the previous step.

    Raises:
        InvalidParameterError: h > ε/4, or dimension outside {1, 2}.
        DivergenceError: a particle leaves |x| <= DIVERGENCE_BOUND.
    """
    _check_eps(eps)
    if rho0.d not in (1, 2):
        raise InvalidParameterError(f"heat simulation runs in 1D or 2D, got d={rho0.d}")
    if not 0 < h <= eps / 4:
        raise InvalidParameterError(f"step h={h} must lie in (0, ε/4] = (0, {eps / 4:g}]")
    if steps < 0:
        raise InvalidParameterError(f"steps must be >= 0, got {steps}")
    snapshot_every = max(1, snapshot_every)

    p = SymmetricAttentionParams.tied(np.eye(rho0.d))
    x = rho0.sample(SeededRng(seed), n, sampling)
    means = [x.mean(axis=0)]
    variances = [x.var(axis=0)]
    snapshots = {0: x.copy()}
    iterations: List[int] = []
    g = None

    logger.info(f"Heat simulation: n={n} d={rho0.d} ε={eps} h={h} steps={steps} ({sampling})")
    start = time.time()
    for step in range(1, steps + 1):
        potentials = solve_potentials(x, p, eps, tol=tol, initial=g, block=block)
        g = potentials.g
        iterations.append(potentials.iterations)
        x = x + h * rescaled_sink_field(x, p, eps, x, potentials=potentials, block=block)
        peak = float(np.abs(x).max())
        if not np.isfinite(peak) or peak > settings.divergence_bound:
            raise DivergenceError(f"heat simulation diverged at step {step} (max |x| = {peak:.3e})", step, peak)
        means.append(x.mean(axis=0))
        variances.append(x.var(axis=0))
        if step % snapshot_every == 0 or step == steps:
            snapshots[step] = x.copy()
        if step % 10 == 0:
            logger.info(f"  step {step}/{steps}: variance {variances[-1].mean():.4f}")

    logger.info(f"Heat simulation finished in {time.time() - start:.1f}s")
    return HeatTrace(
        times=h * np.arange(steps + 1),
        means=np.array(means),
        variances=np.array(variances),
        snapshots=snapshots,
        iterations=iterations,
    )
