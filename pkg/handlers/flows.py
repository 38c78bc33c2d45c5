from typing import Literal, Tuple

import numpy as np
import pandas as pd

from handlers.router import ExperimentConfig, Router
from services.flows import (
    FlowConfig,
    SymmetricAttentionParams,
    euler_flow,
    make_field,
    random_symmetric_params,
    stacked_jacobian,
    symmetry_defect,
)
from services.numerics import ParticleCloud, SeededRng, gaussian_sample
from utils.io import write_csv, write_json
from utils.logger import logger

router = Router()

FIELD_KINDS = ("k0", "k1", "kinf")


def _instance(seed: int, n: int, d: int, scale: float) -> Tuple[ParticleCloud, SymmetricAttentionParams]:
    """Random symmetric parameters (W_V = -W_Qᵀ W_K) and a standard Gaussian cloud from one seed."""
    param_rng, cloud_rng = SeededRng(seed).split(2)
    return gaussian_sample(cloud_rng, n, d), random_symmetric_params(param_rng, d, scale)


def _instance_arguments(parser) -> None:
    parser.add_argument("--kind", choices=FIELD_KINDS, default=None)
    parser.add_argument("--n", type=int, default=None, help="particles")
    parser.add_argument("--d", type=int, default=None, help="dimension")
    parser.add_argument("--scale", type=float, default=None, help="std·√d of the tied weight entries")
    parser.add_argument("--tol", type=float, default=None, help="Sinkhorn tolerance for kinf")


# ─── flow ────────────────────────────────────────────────────────────────────

class FlowCommandConfig(ExperimentConfig):
    kind: Literal["k0", "k1", "kinf"] = "k0"
    n: int = 8
    d: int = 2
    scale: float = 0.5
    h: float = 1e-3
    steps: int = 200
    tol: float = 1e-10
    out: str = "trajectory.csv"
    energy: str = "energy.csv"


def _flow_arguments(parser) -> None:
    _instance_arguments(parser)
    parser.add_argument("--h", type=float, default=None, help="Euler step")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--out", default=None, help="trajectory CSV")
    parser.add_argument("--energy", default=None, help="energy CSV")


@router.command("flow", FlowCommandConfig, "Euler-integrate particles under an attention field", _flow_arguments)
def cmd_flow(cfg: FlowCommandConfig) -> int:
    X0, p = _instance(cfg.seed, cfg.n, cfg.d, cfg.scale)
    trajectory = euler_flow(X0, FlowConfig(cfg.h, cfg.steps, cfg.kind, cfg.tol), p)

    steps = len(trajectory.clouds)
    positions = np.concatenate(trajectory.clouds)
    frame = pd.DataFrame({
        "step": np.repeat(np.arange(steps), cfg.n),
        "particle": np.tile(np.arange(cfg.n), steps),
    })
    for k in range(cfg.d):
        frame[f"x{k}"] = positions[:, k]
    write_csv(frame, cfg.output_path(cfg.out))

    if trajectory.energies is None:
        logger.info("SoftMax field carries no energy; energy trace not written")
        return 0
    write_csv(
        pd.DataFrame({"step": np.arange(steps), "time": trajectory.times, "energy": trajectory.energies}),
        cfg.output_path(cfg.energy),
    )
    increases = int(np.sum(np.diff(trajectory.energies) > 1e-10))
    if increases:
        logger.warning(f"Energy increased on {increases} of {steps - 1} steps")
    return 0


# ─── jacobian ────────────────────────────────────────────────────────────────

class JacobianCommandConfig(ExperimentConfig):
    kind: Literal["k0", "k1", "kinf"] = "k1"
    n: int = 6
    d: int = 2
    scale: float = 0.5
    step: float = 1e-6
    tol: float = 1e-12
    out: str = "jacobian.json"


def _jacobian_arguments(parser) -> None:
    _instance_arguments(parser)
    parser.add_argument("--step", type=float, default=None, help="finite-difference step")
    parser.add_argument("--out", default=None, help="report JSON")


@router.command(
    "jacobian", JacobianCommandConfig, "Symmetry defect of the stacked Jacobian of a field", _jacobian_arguments
)
def cmd_jacobian(cfg: JacobianCommandConfig) -> int:
    X, p = _instance(cfg.seed, cfg.n, cfg.d, cfg.scale)
    J = stacked_jacobian(make_field(cfg.kind, p, cfg.tol), X, cfg.step)
    defect = symmetry_defect(J)
    logger.info(f"Field {cfg.kind}: symmetry defect {defect:.3e}")
    write_json(
        {
            "kind": cfg.kind,
            "n": cfg.n,
            "d": cfg.d,
            "seed": cfg.seed,
            "symmetry_defect": defect,
            "jacobian_norm": float(np.linalg.norm(J)),
        },
        cfg.output_path(cfg.out),
    )
    return 0
