from typing import List, Literal, Tuple

import numpy as np
from pydantic import field_validator

from handlers.router import ExperimentConfig, Router
from services.errors import InvalidParameterError
from services.flows import SymmetricAttentionParams
from services.meanfield import (
    SINK_DRIFT_SCALE,
    DensityModel,
    EpsilonSweep,
    epsilon_convergence_experiment,
    heat_simulation,
    uniform_grid,
    variance_slope,
)
from utils.io import write_csv, write_json
from utils.logger import logger

router = Router()


def make_density(kind: str, d: int = 1) -> DensityModel:
    if kind == "gaussian":
        return DensityModel.standard(d)
    if kind == "bimodal":
        offset = np.zeros(d)
        offset[0] = 1.0
        cov = 0.25 * np.eye(d)
        return DensityModel.mixture([(0.5, -offset, cov), (0.5, offset, cov)])
    raise InvalidParameterError(f"unknown density '{kind}'")


# ─── diffusion-limit ─────────────────────────────────────────────────────────

class DiffusionLimitConfig(ExperimentConfig):
    which: Literal["sink", "softmax"] = "sink"
    density: Literal["gaussian", "bimodal"] = "gaussian"
    n: int = 10_000
    eps: List[float] = [0.5, 0.2, 0.1, 0.05]
    grid: str = "-1.5:1.5:21"
    sampling: Literal["iid", "stratified"] = "stratified"
    query_scale: float = 2.0
    out: str = "diffusion_limit.csv"

    @field_validator("eps", mode="before")
    @classmethod
    def split_eps(cls, value):
        if isinstance(value, str):
            return [float(v) for v in value.split(",") if v.strip()]
        return value

    @field_validator("grid")
    @classmethod
    def check_grid(cls, value: str) -> str:
        parts = value.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid must look like a:b:k, got '{value}'")
        float(parts[0])
        float(parts[1])
        if int(parts[2]) < 1:
            raise ValueError("grid needs at least one point")
        return value

    @property
    def grid_spec(self) -> Tuple[float, float, int]:
        a, b, k = self.grid.split(":")
        return float(a), float(b), int(k)

    def attention_params(self) -> SymmetricAttentionParams:
        """W_Q = W_K = I for the Sinkhorn map; W_Q = query_scale·I, W_K = I for SoftMax."""
        if self.which == "sink":
            return SymmetricAttentionParams.tied(np.eye(1))
        return SymmetricAttentionParams(self.query_scale * np.eye(1), np.eye(1))


def _diffusion_arguments(parser) -> None:
    parser.add_argument("--which", choices=("sink", "softmax"), default=None)
    parser.add_argument("--density", choices=("gaussian", "bimodal"), default=None)
    parser.add_argument("--n", type=int, default=None, help="samples per bandwidth")
    parser.add_argument("--eps", default=None, help="comma-separated, strictly decreasing bandwidths")
    parser.add_argument("--grid", default=None, help="query grid a:b:k")
    parser.add_argument("--sampling", choices=("iid", "stratified"), default=None)
    parser.add_argument("--query-scale", dest="query_scale", type=float, default=None)
    parser.add_argument("--out", default=None, help="sweep CSV")


@router.command(
    "diffusion-limit", DiffusionLimitConfig, "RMS error of a rescaled attention map along a bandwidth sweep",
    _diffusion_arguments,
)
def cmd_diffusion_limit(cfg: DiffusionLimitConfig) -> int:
    sweep = EpsilonSweep(tuple(cfg.eps), cfg.n, uniform_grid(*cfg.grid_spec), cfg.seed, cfg.sampling)
    table = epsilon_convergence_experiment(make_density(cfg.density), cfg.attention_params(), sweep, cfg.which)
    if cfg.which == "sink":
        table["drift_scale"] = SINK_DRIFT_SCALE
    decreasing = bool(np.all(np.diff(table["rms_error"].to_numpy()) < 0))
    logger.info(
        f"Final relative RMS {table['relative_rms'].iloc[-1]:.2%}; "
        f"error {'decreases' if decreasing else 'does NOT decrease'} along the sweep"
    )
    write_csv(table, cfg.output_path(cfg.out))
    return 0


# ─── heat-sim ────────────────────────────────────────────────────────────────

class HeatSimConfig(ExperimentConfig):
    density: Literal["gaussian", "bimodal"] = "gaussian"
    d: int = 1
    n: int = 2000
    eps: float = 0.05
    h: float = 0.01
    steps: int = 50
    sampling: Literal["iid", "stratified"] = "stratified"
    snapshot_every: int = 10
    out: str = "variance.csv"
    summary: str = "heat_summary.json"


def _heat_arguments(parser) -> None:
    parser.add_argument("--density", choices=("gaussian", "bimodal"), default=None)
    parser.add_argument("--d", type=int, default=None, choices=(1, 2))
    parser.add_argument("--n", type=int, default=None, help="particles")
    parser.add_argument("--eps", type=float, default=None, help="bandwidth")
    parser.add_argument("--h", type=float, default=None, help="time step (<= eps/4)")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--sampling", choices=("iid", "stratified"), default=None)
    parser.add_argument("--snapshot-every", dest="snapshot_every", type=int, default=None)
    parser.add_argument("--out", default=None, help="variance CSV")
    parser.add_argument("--summary", default=None, help="summary JSON")


@router.command("heat-sim", HeatSimConfig, "Particles driven by the Sinkhorn map versus the heat equation", _heat_arguments)
def cmd_heat_sim(cfg: HeatSimConfig) -> int:
    rho0 = make_density(cfg.density, cfg.d)
    trace = heat_simulation(
        rho0, cfg.eps, cfg.h, cfg.steps, cfg.n,
        seed=cfg.seed, sampling=cfg.sampling, snapshot_every=cfg.snapshot_every,
    )
    write_csv(trace.to_frame(), cfg.output_path(cfg.out))

    summary = {
        "final_time": float(trace.times[-1]),
        "initial_variance": float(trace.variance[0]),
        "final_variance": float(trace.variance[-1]),
        "heat_equation_variance": float(trace.variance[0] + 2.0 * trace.times[-1]),
        "solver_iterations": trace.iterations,
    }
    if trace.times.size >= 2:
        summary["variance_slope"] = variance_slope(trace)
        logger.info(f"Variance slope {summary['variance_slope']:.3f} (heat equation: 2)")
    write_json(summary, cfg.output_path(cfg.summary))
    return 0
